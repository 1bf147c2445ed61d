"""Speedup normalization over sweep result rows.

Input rows come from the simulator's sweep CSV (columns include trace,
scenario, policy, cycles).  Speedup is baseline cycles over scenario
cycles, per trace; a geometric-mean row is appended, plus a second one
over the non-excluded traces when an exclude list is given (the usual
"average without the outlier benchmark" convention).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field


class MissingBaseline(Exception):
    def __init__(self, baseline: str, traces: list[str]):
        pairs = ", ".join(f"({t}, {baseline})" for t in traces)
        super().__init__(f"no baseline rows for: {pairs}")
        self.pairs = traces


class DuplicateRow(Exception):
    pass


@dataclass
class ResultSet:
    """(trace, scenario) -> cycles, with stable first-seen ordering."""

    traces: list[str] = field(default_factory=list)
    scenarios: list[str] = field(default_factory=list)
    cycles: dict[tuple[str, str], float] = field(default_factory=dict)

    def add(self, trace: str, scenario: str, cycles: float) -> None:
        key = (trace, scenario)
        if key in self.cycles:
            raise DuplicateRow(f"duplicate result row for {key}")
        if trace not in self.traces:
            self.traces.append(trace)
        if scenario not in self.scenarios:
            self.scenarios.append(scenario)
        self.cycles[key] = cycles


def scenario_label(scenario: str, policy: str) -> str:
    if policy and policy not in ("-", "aware"):
        return f"{scenario}:{policy}"
    return scenario


def load_results(path: str) -> ResultSet:
    rs = ResultSet()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"trace", "scenario", "cycles"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            label = scenario_label(row["scenario"], row.get("policy", ""))
            rs.add(row["trace"], label, float(row["cycles"]))
    return rs


@dataclass
class SpeedupTable:
    scenarios: list[str]
    rows: list[tuple[str, str, list[float]]]  # (label, excluded-mark, speedups)


def geomean(values: list[float]) -> float:
    return math.prod(values) ** (1.0 / len(values))


def normalize(rs: ResultSet, baseline: str,
              exclude: list[str] | None = None) -> SpeedupTable:
    exclude = exclude or []
    absent = [t for t in rs.traces if (t, baseline) not in rs.cycles]
    if baseline not in rs.scenarios or absent:
        raise MissingBaseline(baseline, absent or rs.traces)
    unknown = [t for t in exclude if t not in rs.traces]
    if unknown:
        raise ValueError(f"exclude list names unknown traces: {unknown}")

    rows: list[tuple[str, str, list[float]]] = []
    per_scenario: dict[str, list[float]] = {s: [] for s in rs.scenarios}
    kept: dict[str, list[float]] = {s: [] for s in rs.scenarios}
    for trace in rs.traces:
        base = rs.cycles[(trace, baseline)]
        speeds = []
        for s in rs.scenarios:
            cyc = rs.cycles.get((trace, s))
            if cyc is None or cyc == 0:
                raise ValueError(f"no usable cycles for ({trace}, {s})")
            speeds.append(base / cyc)
        mark = "yes" if trace in exclude else ""
        rows.append((trace, mark, speeds))
        for s, v in zip(rs.scenarios, speeds):
            per_scenario[s].append(v)
            if trace not in exclude:
                kept[s].append(v)

    rows.append(("geomean", "", [geomean(per_scenario[s]) for s in rs.scenarios]))
    if exclude:
        if not any(kept[rs.scenarios[0]]):
            raise ValueError("exclude list removes every trace")
        rows.append(("geomean_excluding_" + "_".join(exclude), "",
                     [geomean(kept[s]) for s in rs.scenarios]))
    return SpeedupTable(list(rs.scenarios), rows)


def table_to_csv(table: SpeedupTable) -> str:
    out = ["trace,excluded," + ",".join(table.scenarios)]
    for label, mark, speeds in table.rows:
        out.append(",".join([label, mark] + [repr(v) for v in speeds]))
    return "\n".join(out) + "\n"


def csv_to_table(text: str) -> SpeedupTable:
    lines = [l for l in text.splitlines() if l.strip()]
    header = lines[0].split(",")
    scenarios = header[2:]
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append((parts[0], parts[1], [float(v) for v in parts[2:]]))
    return SpeedupTable(scenarios, rows)
