from __future__ import annotations

import numpy as np
import pytest

import oracles
from fusefl.errors import ConfigError, OddClientCount, TooLarge
from fusefl.grouping import (
    GroupAssignment,
    RiskMatrix,
    match,
    match_brute_force,
    match_exact,
    match_greedy,
    match_sequential,
    risk_update,
    schedule_next_round,
)


def test_fixture_pairs(golden):
    risk = RiskMatrix.from_file(golden / "risk4.txt")
    a = match_exact(risk)
    assert a.pairs == [(0, 2), (1, 3)]
    assert a.cost(risk) == pytest.approx(0.2)


def test_greedy_adversarial(golden):
    risk = RiskMatrix.from_file(golden / "risk_adversarial.txt")
    assert match_greedy(risk).cost(risk) == pytest.approx(1.0)
    assert match_exact(risk).cost(risk) == pytest.approx(0.4)


def test_uniform_cost():
    risk = RiskMatrix.uniform(8, 0.25)
    assert match_exact(risk).cost(risk) == pytest.approx(4 * 0.25)


def test_exact_matches_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(40):
        n = int(rng.choice([2, 4, 6, 8]))
        rho = rng.random((n, n))
        risk = RiskMatrix((rho + rho.T) / 2)
        assert match_exact(risk).cost(risk) == pytest.approx(oracles.min_matching_cost(risk.rho.tolist()))
        assert match_brute_force(risk).cost(risk) == pytest.approx(match_exact(risk).cost(risk))


def test_odd_and_cap():
    with pytest.raises(OddClientCount):
        match_exact(RiskMatrix.uniform(5))
    with pytest.raises(OddClientCount):
        match_greedy(RiskMatrix.uniform(3))
    with pytest.raises(TooLarge):
        match_exact(RiskMatrix.uniform(10), cap=8)


def test_validation():
    with pytest.raises(ValueError):
        RiskMatrix(np.array([[0, 2.0], [2.0, 0]]))
    with pytest.raises(ValueError):
        RiskMatrix(np.array([[0, 0.1], [0.2, 0]]))
    with pytest.raises(ConfigError):
        match(RiskMatrix.uniform(2), "annealing")


def test_bad_matrix_file(tmp_path):
    (tmp_path / "m").write_text("0 1\n1 0 0\n")
    with pytest.raises(ConfigError):
        RiskMatrix.from_file(tmp_path / "m")


def test_metadata_scores(golden):
    risk = RiskMatrix.from_metadata(golden / "metadata4.txt")
    assert risk.rho[0, 1] == pytest.approx(0.4)
    assert risk.rho[0, 2] == pytest.approx(0.6)
    assert risk.rho[1, 3] == pytest.approx(0.3)
    assert risk.rho[0, 3] == 0.0
    assert match_exact(risk).pairs == [(0, 3), (1, 2)]


def test_sequential():
    assert match_sequential(6).pairs == [(0, 1), (2, 3), (4, 5)]


def test_repeats_only_when_unavoidable():
    # a pair is reused only if no perfect matching avoids all earlier pairs
    for n in (4, 6, 8):
        base = RiskMatrix.uniform(n, 0.0)
        history: list[GroupAssignment] = []
        for r in range(n + 2):
            a = match_exact(risk_update(history, base, 0.1), r)
            used = {p for h in history for p in h.pairs}
            if set(a.pairs) & used:
                assert not oracles.repeat_free_matching_exists(n, frozenset(used))
            history.append(a)


def test_risk_update_caps_at_one():
    base = RiskMatrix.uniform(4, 0.95)
    upd = risk_update([GroupAssignment(0, [(0, 1), (2, 3)])], base, 0.5)
    assert upd.rho[0, 1] == 1.0 and upd.rho[0, 2] == 0.95


def test_schedule_overlaps_training():
    base = RiskMatrix.uniform(4, 0.0)
    fast = schedule_next_round(10.0, 5.0, [], base, matching_time=1.0)
    slow = schedule_next_round(10.0, 5.0, [], base, matching_time=7.5)
    assert fast.added_latency == 0.0 and fast.ready_at == 11.0
    assert slow.added_latency == pytest.approx(2.5)
    assert fast.assignment.round == 0


def test_greedy_is_perfect_and_never_better():
    rng = np.random.default_rng(1)
    for n in (2, 4, 6, 8, 10):
        rho = rng.random((n, n))
        risk = RiskMatrix((rho + rho.T) / 2)
        g = match_greedy(risk)
        g.validate(n)
        assert g.cost(risk) >= match_exact(risk).cost(risk) - 1e-12


def test_partner():
    a = GroupAssignment(0, [(3, 1), (0, 2)])
    assert a.pairs == [(0, 2), (1, 3)]
    assert a.partner(3) == 1 and a.partner(0) == 2


def test_brute_force_enumerates_all():
    from fusefl.grouping import all_perfect_matchings

    for n in (2, 4, 6, 8):
        count = sum(1 for _ in all_perfect_matchings(list(range(n))))
        assert count == int(np.prod(range(n - 1, 0, -2)))
        assert count == len({frozenset(m) for m in all_perfect_matchings(list(range(n)))})
