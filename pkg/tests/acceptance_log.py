"""Collects one verdict line per acceptance criterion for the terminal summary."""

from __future__ import annotations

LINES: dict[int, str] = {}
TITLES = {
    1: "MPC primitive correctness",
    2: "FSS comparison completeness",
    3: "secure vs plaintext training",
    4: "scheme equivalence in twin mode",
    5: "memory table",
    6: "communication halving",
    7: "latency cross-check",
    8: "throughput and scaling trend",
    9: "matching optimality",
    10: "WW-FL upload table",
    11: "accuracy trend on MNIST",
}


def record(number: int, ok: bool, detail: str) -> None:
    LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {TITLES[number]}  ({detail})"
    print(LINES[number])


def skip(number: int, reason: str) -> None:
    LINES[number] = f"criterion {number}: SKIP  {TITLES[number]}  ({reason})"


def summary() -> list[str]:
    out = []
    for n in sorted(TITLES):
        out.append(LINES.get(n, f"criterion {n}: SKIP  {TITLES[n]}  (not run)"))
    return out
