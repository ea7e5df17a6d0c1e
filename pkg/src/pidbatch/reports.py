"""Structured assertion records: one checked claim per line of text output."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class Check:
    """A single comparison; kind 'eq' tests |lhs-rhs| <= tol, 'le' tests lhs <= rhs + tol."""

    name: str
    lhs: float
    rhs: float
    tol: float
    kind: str = "eq"

    @property
    def passed(self) -> bool:
        if self.kind == "eq":
            return abs(self.lhs - self.rhs) <= self.tol
        if self.kind == "le":
            return self.lhs <= self.rhs + self.tol
        raise ValueError(f"unknown check kind {self.kind!r}")

    def line(self) -> str:
        op = "==" if self.kind == "eq" else "<="
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{self.name} lhs={self.lhs!r} {op} rhs={self.rhs!r} "
                f"tol={self.tol:g} {verdict}")


def render_report(title: str, checks: list[Check], notes: tuple[str, ...] = ()) -> str:
    lines = [f"# {title}"]
    lines += [f"# note: {n}" for n in notes]
    lines += [c.line() for c in checks]
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"# {len(checks) - n_fail}/{len(checks)} checks passed")
    return "\n".join(lines) + "\n"


def all_pass(checks: list[Check]) -> bool:
    return all(c.passed for c in checks)
