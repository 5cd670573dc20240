"""Judge-score aggregation: LScore and the two Overall variants.

Input files are CSV with header ``model,sc,pq,lsc,lpq``; each score lies in
[0, 10].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources

from .numcore import ContractError

HEADER = ["model", "sc", "pq", "lsc", "lpq"]
REPORT_HEADER = ["model", "lscore", "overall_geo4", "overall_mixed"]
FIXTURES = ("table1", "gedit")


class ScoreFileError(ValueError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        super().__init__("; ".join(f"line {n}: {msg}" for n, msg in problems))


def _check(*scores: float) -> None:
    for s in scores:
        if not 0.0 <= s <= 10.0:
            raise ContractError(f"score {s} outside [0, 10]")


@dataclass(frozen=True)
class ScoreRecord:
    model_name: str
    sc: float
    pq: float
    lsc: float
    lpq: float

    def __post_init__(self):
        _check(self.sc, self.pq, self.lsc, self.lpq)


def lscore(lsc: float, lpq: float) -> float:
    """Geometric mean of the local scores."""
    _check(lsc, lpq)
    return math.sqrt(lsc * lpq)


def overall_geo4(r: ScoreRecord) -> float:
    return (r.sc * r.pq * r.lsc * r.lpq) ** 0.25


def overall_mixed(r: ScoreRecord) -> float:
    """sqrt(mean(SC, LSC) * mean(PQ, LPQ)) -- the variant that reproduces the
    published tables."""
    return math.sqrt(((r.sc + r.lsc) / 2.0) * ((r.pq + r.lpq) / 2.0))


def round3(x: float) -> float:
    # round() is correctly rounded with ties to even
    return round(x, 3)


@dataclass(frozen=True)
class ReportRow:
    model: str
    lscore: float
    overall_geo4: float
    overall_mixed: float
    rank: int


def parse_scores(text: str) -> list[ScoreRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ScoreFileError([(1, "empty file, expected header " + ",".join(HEADER))]) from None
    if [h.strip().lower() for h in header] != HEADER:
        raise ScoreFileError([(1, f"header {header} != {HEADER}")])
    records, problems = [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            problems.append((line, f"expected {len(HEADER)} fields, got {len(row)}"))
            continue
        try:
            values = [float(c) for c in row[1:]]
        except ValueError as exc:
            problems.append((line, str(exc)))
            continue
        if not all(math.isfinite(v) and 0.0 <= v <= 10.0 for v in values):
            problems.append((line, f"scores {values} outside [0, 10]"))
            continue
        records.append(ScoreRecord(row[0].strip(), *values))
    if problems:
        raise ScoreFileError(problems)
    return records


def aggregate(records) -> list[ReportRow]:
    """Per-model aggregates at 3 decimals, ranked by overall_mixed (best first).

    Ties in the rounded score are broken by model name, so the ranking does not
    depend on input order.
    """
    scored = [
        (r.model_name, round3(lscore(r.lsc, r.lpq)), round3(overall_geo4(r)), round3(overall_mixed(r)))
        for r in records
    ]
    scored.sort(key=lambda s: (-s[3], s[0]))
    return [ReportRow(m, ls, g4, mx, i + 1) for i, (m, ls, g4, mx) in enumerate(scored)]


def aggregate_file(path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        return aggregate(parse_scores(fh.read()))


def fixture_text(name: str) -> str:
    if name not in FIXTURES:
        raise ContractError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    return resources.files("flowcouple").joinpath("data", f"{name}.csv").read_text()


def format_table(rows) -> str:
    cols = ["rank", "model", "lscore", "overall_geo4", "overall_mixed"]
    body = [[str(r.rank), r.model, f"{r.lscore:.3f}", f"{r.overall_geo4:.3f}", f"{r.overall_mixed:.3f}"]
            for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r.model, f"{r.lscore:.3f}", f"{r.overall_geo4:.3f}", f"{r.overall_mixed:.3f}"])
    return buf.getvalue()
