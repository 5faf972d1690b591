"""Trace records: JSONL (header + one record per event) and a summary CSV."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

CSV_FIELDS = ("iteration", "clock", "loss", "residual", "planes", "accuracy")


class TraceFormatError(ValueError):
    pass


def dumps(record):
    """Canonical one-line encoding; floats use the shortest round-trip repr."""
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


@dataclass
class Trace:
    header: dict
    records: list = field(default_factory=list)

    def lines(self):
        yield dumps(self.header)
        for rec in self.records:
            yield dumps(rec)

    def text(self):
        return "".join(line + "\n" for line in self.lines())

    def iterations(self):
        return [r for r in self.records if r.get("type") == "iter"]

    def of_type(self, kind):
        return [r for r in self.records if r.get("type") == kind]

    @property
    def summary(self):
        found = self.of_type("summary")
        return found[-1] if found else None

    def write(self, out_dir, stem="trace"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jsonl = out / f"{stem}.jsonl"
        jsonl.write_text(self.text(), encoding="utf-8")
        table = out / f"{stem}.csv"
        with table.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            for rec in self.iterations():
                residual = rec.get("residual")
                writer.writerow([
                    rec["iteration"],
                    repr(rec["clock"]),
                    repr(rec["loss"]),
                    "" if residual is None else repr(float(sum(residual))),
                    rec["planes"],
                    "" if rec.get("accuracy") is None else repr(rec["accuracy"]),
                ])
        return jsonl, table

    @classmethod
    def read(cls, path):
        lines = read_lines(path)
        try:
            header = json.loads(lines[0])
            records = [json.loads(line) for line in lines[1:]]
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"{path}: not a JSONL trace ({exc})") from exc
        if header.get("type") != "header":
            raise TraceFormatError(f"{path}: first record is not a header")
        return cls(header, records)


def read_lines(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise TraceFormatError(f"{path}: empty trace")
    return lines


def first_divergence(expected_lines, actual_lines):
    """Index of the first differing line (header is record 0), or None."""
    for i, (a, b) in enumerate(zip(expected_lines, actual_lines)):
        if a != b:
            return i
    if len(expected_lines) != len(actual_lines):
        return min(len(expected_lines), len(actual_lines))
    return None


def check_invariants(trace: Trace):
    """Iterations strictly increasing and clock nondecreasing."""
    prev_it, prev_clock = None, None
    for rec in trace.iterations():
        if prev_it is not None and rec["iteration"] <= prev_it:
            raise AssertionError(f"iteration {rec['iteration']} does not follow {prev_it}")
        if prev_clock is not None and rec["clock"] < prev_clock:
            raise AssertionError(f"clock went backwards at iteration {rec['iteration']}")
        prev_it, prev_clock = rec["iteration"], rec["clock"]
