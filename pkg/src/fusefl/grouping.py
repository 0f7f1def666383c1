"""Risk-aware pairing of clients into two-party training groups.

Pairs are chosen to minimise the summed collusion risk over a perfect
matching. The exact matcher delegates to the Blossom implementation in
networkx; a greedy matcher trades optimality for speed, and a brute-force
enumerator serves as the oracle for small ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import ConfigError, OddClientCount, TooLarge

DEFAULT_EXACT_CAP = 64

# invented scoring constants for metadata-derived risk
SAME_JURISDICTION = 0.4
SAME_SECTOR = 0.3
SAME_AFFILIATION = 0.3


@dataclass
class RiskMatrix:
    rho: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=np.float64)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise ValueError(f"risk matrix must be square, got shape {rho.shape}")
        off = ~np.eye(len(rho), dtype=bool)
        if np.any(rho[off] < 0) or np.any(rho[off] > 1):
            raise ValueError("risk scores must lie in [0, 1]")
        if not np.allclose(rho, rho.T):
            raise ValueError("risk matrix must be symmetric")
        np.fill_diagonal(rho, 0.0)
        self.rho = rho

    @property
    def n(self) -> int:
        return len(self.rho)

    @classmethod
    def uniform(cls, n: int, value: float = 0.0) -> RiskMatrix:
        return cls(np.full((n, n), value))

    @classmethod
    def from_pairs(cls, n: int, pairs: dict, default: float = 0.0) -> RiskMatrix:
        rho = np.full((n, n), default)
        for (i, j), v in pairs.items():
            rho[i, j] = rho[j, i] = v
        return cls(rho)

    @classmethod
    def from_file(cls, path) -> RiskMatrix:
        """Whitespace-separated square matrix, one row per line; ``#`` starts a comment."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                try:
                    rows.append([float(v) for v in line.split()])
                except ValueError as exc:
                    raise ConfigError(f"{path}: non-numeric entry in risk matrix") from exc
        if not rows or any(len(r) != len(rows) for r in rows):
            raise ConfigError(f"{path}: risk matrix must be square")
        try:
            return cls(np.array(rows))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    @classmethod
    def from_metadata(cls, path) -> RiskMatrix:
        """Derive scores from client metadata records.

        One line per client: ``client_id jurisdiction sector affiliation``,
        with ``-`` for an undeclared affiliation. A pair scores 0.4 for a
        shared jurisdiction, 0.3 for a shared sector and 0.3 for a shared
        declared affiliation, capped at 1.
        """
        recs = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ConfigError(f"{path}: expected 4 fields per record, got {len(parts)}")
            recs[int(parts[0])] = parts[1:]
        n = len(recs)
        if sorted(recs) != list(range(n)):
            raise ConfigError(f"{path}: client ids must be 0..{n - 1}")
        rho = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                a, b = recs[i], recs[j]
                score = (SAME_JURISDICTION * (a[0] == b[0]) + SAME_SECTOR * (a[1] == b[1])
                         + SAME_AFFILIATION * (a[2] == b[2] and a[2] != "-"))
                rho[i, j] = rho[j, i] = min(1.0, score)
        return cls(rho)


@dataclass
class GroupAssignment:
    round: int
    pairs: list[tuple[int, int]]

    def __post_init__(self):
        self.pairs = sorted((min(i, j), max(i, j)) for i, j in self.pairs)

    def validate(self, n: int) -> None:
        seen = [c for p in self.pairs for c in p]
        if sorted(seen) != list(range(n)):
            raise ValueError("assignment is not a perfect matching")

    def cost(self, risk: RiskMatrix) -> float:
        return float(sum(risk.rho[i, j] for i, j in self.pairs))

    def partner(self, client: int) -> int:
        for i, j in self.pairs:
            if client in (i, j):
                return j if client == i else i
        raise KeyError(client)


def _check_even(n: int) -> None:
    if n % 2:
        raise OddClientCount(f"odd client count {n}: every client needs a partner")


def match_exact(risk: RiskMatrix, round_index: int = 0, cap: int = DEFAULT_EXACT_CAP) -> GroupAssignment:
    """Minimum-risk perfect matching (Blossom)."""
    n = risk.n
    _check_even(n)
    if n > cap:
        raise TooLarge(f"exact matching is capped at {cap} clients, got {n}")
    g = nx.Graph()
    g.add_nodes_from(range(n))
    for i in range(n):
        for j in range(i + 1, n):
            g.add_edge(i, j, weight=float(risk.rho[i, j]))
    pairs = nx.min_weight_matching(g) if n else set()
    out = GroupAssignment(round_index, list(pairs))
    out.validate(n)
    return out


def match_greedy(risk: RiskMatrix, round_index: int = 0) -> GroupAssignment:
    """Repeatedly take the lowest-risk edge whose endpoints are both free."""
    n = risk.n
    _check_even(n)
    iu, ju = np.triu_indices(n, 1)
    order = np.lexsort((ju, iu, risk.rho[iu, ju]))
    free = np.ones(n, dtype=bool)
    pairs = []
    for k in order:
        i, j = int(iu[k]), int(ju[k])
        if free[i] and free[j]:
            free[i] = free[j] = False
            pairs.append((i, j))
            if len(pairs) == n // 2:
                break
    return GroupAssignment(round_index, pairs)


def match_sequential(n: int, round_index: int = 0) -> GroupAssignment:
    """Risk-oblivious pairing (0,1), (2,3), ... for large metering runs."""
    _check_even(n)
    return GroupAssignment(round_index, [(i, i + 1) for i in range(0, n, 2)])


def all_perfect_matchings(nodes: list[int]):
    if not nodes:
        yield []
        return
    first, rest = nodes[0], nodes[1:]
    for k, other in enumerate(rest):
        for tail in all_perfect_matchings(rest[:k] + rest[k + 1:]):
            yield [(first, other)] + tail


def match_brute_force(risk: RiskMatrix, round_index: int = 0) -> GroupAssignment:
    """Enumerate all (n-1)!! perfect matchings; the test oracle."""
    _check_even(risk.n)
    best, best_cost = None, np.inf
    for m in all_perfect_matchings(list(range(risk.n))):
        c = sum(risk.rho[i, j] for i, j in m)
        if c < best_cost:
            best, best_cost = m, c
    return GroupAssignment(round_index, best or [])


MATCHERS = ("exact", "greedy", "sequential")


def match(risk: RiskMatrix, matcher: str = "exact", round_index: int = 0,
          cap: int = DEFAULT_EXACT_CAP) -> GroupAssignment:
    if matcher == "exact":
        return match_exact(risk, round_index, cap)
    if matcher == "greedy":
        return match_greedy(risk, round_index)
    if matcher == "sequential":
        return match_sequential(risk.n, round_index)
    raise ConfigError(f"unknown matcher {matcher!r}; choose one of {', '.join(MATCHERS)}")


def risk_update(history: list[GroupAssignment], base: RiskMatrix, repeat_penalty: float) -> RiskMatrix:
    """``min(1, base + penalty * times_paired)`` for every pair."""
    if repeat_penalty < 0:
        raise ValueError("repeat_penalty must be non-negative")
    rho = base.rho.copy()
    for a in history:
        for i, j in a.pairs:
            rho[i, j] += repeat_penalty
            rho[j, i] += repeat_penalty
    np.minimum(rho, 1.0, out=rho)
    return RiskMatrix(rho)


@dataclass(frozen=True)
class ScheduledRound:
    assignment: GroupAssignment
    ready_at: float
    added_latency: float


def schedule_next_round(round_start: float, round_duration: float, history: list[GroupAssignment],
                        base: RiskMatrix, matcher: str = "exact", repeat_penalty: float = 0.0,
                        matching_time: float = 0.0, cap: int = DEFAULT_EXACT_CAP) -> ScheduledRound:
    """Compute round ``t+1``'s pairing while round ``t`` trains.

    On the logical clock the matching starts with the round, so it only
    delays the next round if it outlasts the training itself.
    """
    nxt = len(history)
    assignment = match(risk_update(history, base, repeat_penalty), matcher, nxt, cap)
    return ScheduledRound(assignment, round_start + matching_time,
                          max(0.0, matching_time - round_duration))
