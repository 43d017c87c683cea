"""Two-phase experiment driver: counts, gas values, record consistency."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest

from chainmarket.chain import BackgroundModel, ChainConfig
from chainmarket.workload import (
    PHASE_ENFORCEMENT,
    PHASE_PRELIMINARY,
    ExperimentPlan,
    FeePolicy,
    WorkloadError,
    provision_accounts,
    run_phase1,
    run_phase2,
    summarize_by_batch,
)

# Small plans keep unit runs fast; acceptance exercises the full sweep.
SMALL_CHAIN = ChainConfig(background=BackgroundModel(arrival_rate=40.0))


def small_plan(phase: str, batch_sizes=(2,), rounds=1, seed=5) -> ExperimentPlan:
    return ExperimentPlan(
        phase=phase,
        batch_sizes=batch_sizes,
        rounds=rounds,
        chain=SMALL_CHAIN,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Provisioning
# ---------------------------------------------------------------------------

def test_even_split_hundred_accounts():
    accounts = provision_accounts(small_plan(PHASE_PRELIMINARY))
    assert len(accounts.providers) == 50
    assert len(accounts.consumers) == 50
    assert all(a.role == "provider" for a in accounts.providers)
    assert all(a.role == "consumer" for a in accounts.consumers)
    assert all(v.stake > 0 for v in accounts.validators)


def test_odd_split_providers_take_floor():
    plan = ExperimentPlan(
        phase=PHASE_PRELIMINARY, batch_sizes=(1,), total_accounts=3, chain=SMALL_CHAIN
    )
    accounts = provision_accounts(plan)
    assert len(accounts.providers) == 1
    assert len(accounts.consumers) == 2


def test_addresses_deterministic_per_seed():
    a = provision_accounts(small_plan(PHASE_PRELIMINARY, seed=5))
    b = provision_accounts(small_plan(PHASE_PRELIMINARY, seed=5))
    c = provision_accounts(small_plan(PHASE_PRELIMINARY, seed=6))
    assert [x.address for x in a.all()] == [x.address for x in b.all()]
    assert [x.address for x in a.providers] != [x.address for x in c.providers]


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(phase="settlement")
    with pytest.raises(ValueError):
        ExperimentPlan(phase=PHASE_PRELIMINARY, rounds=0)
    with pytest.raises(ValueError):
        ExperimentPlan(phase=PHASE_PRELIMINARY, batch_sizes=(101,))
    with pytest.raises(WorkloadError):
        provision_accounts(
            ExperimentPlan(phase=PHASE_PRELIMINARY, total_accounts=1, batch_sizes=(1,))
        )


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------

def test_phase1_record_count_and_composition():
    records = run_phase1(small_plan(PHASE_PRELIMINARY))
    assert len(records) == 12  # 2 providers x 5 adds + 2 selects
    counts = Counter(r.function for r in records)
    assert counts == {"add_service": 10, "select_service": 2}


def test_phase1_add_gas_values():
    records = run_phase1(small_plan(PHASE_PRELIMINARY, batch_sizes=(3,)))
    add_gas = [r.gas_used for r in records if r.function == "add_service"]
    assert set(add_gas) == {162_500, 147_500}
    # One cold add per provider, four warm.
    assert add_gas.count(162_500) == 3
    assert add_gas.count(147_500) == 12


def test_phase1_select_gas_follows_position_cycle():
    records = run_phase1(small_plan(PHASE_PRELIMINARY, batch_sizes=(7,)))
    selects = [r for r in records if r.function == "select_service"]
    # Consumer i picks position (i mod 5) + 1; first-ever selections are cold.
    expected = [155_852 + 140 * (i % 5) for i in range(7)]
    assert [r.gas_used for r in selects] == expected


def test_phase1_covers_all_batches_and_rounds():
    plan = small_plan(PHASE_PRELIMINARY, batch_sizes=(2, 4), rounds=3)
    records = run_phase1(plan)
    cells = {(r.batch_size, r.round) for r in records}
    assert cells == {(b, r) for b in (2, 4) for r in (1, 2, 3)}
    assert len(records) == 3 * (6 * 2 + 6 * 4)


def test_phase1_batch_submissions_within_one_slot():
    records = run_phase1(small_plan(PHASE_PRELIMINARY, batch_sizes=(5,)))
    adds = [r for r in records if r.function == "add_service"]
    span = max(r.submit_time_s for r in adds) - min(r.submit_time_s for r in adds)
    assert span < 12.0


def test_phase1_latency_fields_consistent():
    records = run_phase1(small_plan(PHASE_PRELIMINARY, batch_sizes=(4,)))
    for r in records:
        assert r.latency_s == pytest.approx(r.confirm_time_s - r.submit_time_s)
        assert r.latency_s >= 0
        # confirmation lands on a slot boundary
        assert r.confirm_time_s % 12.0 == pytest.approx(0.0, abs=1e-9)


def test_phase1_block_context_matches_ledger():
    blocks = []
    records = run_phase1(small_plan(PHASE_PRELIMINARY, batch_sizes=(4,)), block_sink=blocks)
    ledger = {(b.phase, b.batch_size, b.round, b.number): b for b in blocks}
    for r in records:
        block = ledger[(r.phase, r.batch_size, r.round, r.block_number)]
        assert r.block_tx_count == block.tx_count
        assert r.block_size_kb == pytest.approx(block.byte_size / 1000.0)
        assert r.confirm_time_s == block.timestamp


def test_phase1_reproducible():
    plan = small_plan(PHASE_PRELIMINARY, batch_sizes=(2, 3), rounds=2)
    assert run_phase1(plan) == run_phase1(plan)
    other = small_plan(PHASE_PRELIMINARY, batch_sizes=(2, 3), rounds=2, seed=6)
    assert run_phase1(plan) != run_phase1(other)


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------

def test_phase2_record_count_and_composition():
    records = run_phase2(small_plan(PHASE_ENFORCEMENT))
    assert len(records) == 8  # 3 breaches x 2 providers + 2 penalties
    counts = Counter(r.function for r in records)
    assert counts == {"register_breach": 6, "calculate_penalty": 2}


def test_phase2_breach_gas_cold_then_warm_per_provider():
    records = run_phase2(small_plan(PHASE_ENFORCEMENT, batch_sizes=(4,)))
    breaches = [r.gas_used for r in records if r.function == "register_breach"]
    # Submission order groups each provider's three breaches together.
    for i in range(4):
        assert breaches[3 * i : 3 * i + 3] == [44_058, 26_958, 26_958]


def test_phase2_penalty_gas_constant():
    records = run_phase2(small_plan(PHASE_ENFORCEMENT, batch_sizes=(5,)))
    penalties = [r for r in records if r.function == "calculate_penalty"]
    assert len(penalties) == 5
    assert {r.gas_used for r in penalties} == {49_143}


def test_phase2_penalties_follow_third_breach():
    records = run_phase2(small_plan(PHASE_ENFORCEMENT, batch_sizes=(3,)))
    last_breach_confirm = max(
        r.confirm_time_s for r in records if r.function == "register_breach"
    )
    for r in records:
        if r.function == "calculate_penalty":
            assert r.submit_time_s > min(
                x.confirm_time_s for x in records if x.function == "register_breach"
            )
    # every penalty confirms after some breach wave resolved
    assert all(
        r.confirm_time_s > 0 for r in records if r.function == "calculate_penalty"
    )
    assert last_breach_confirm > 0


def test_phase2_reproducible():
    plan = small_plan(PHASE_ENFORCEMENT, batch_sizes=(2, 4), rounds=2)
    assert run_phase2(plan) == run_phase2(plan)


def test_record_counts_match_formula_multi_batch():
    plan1 = small_plan(PHASE_PRELIMINARY, batch_sizes=(2, 5, 8), rounds=2)
    plan2 = small_plan(PHASE_ENFORCEMENT, batch_sizes=(2, 5, 8), rounds=2)
    assert len(run_phase1(plan1)) == 2 * sum(6 * b for b in (2, 5, 8))
    assert len(run_phase2(plan2)) == 2 * sum(4 * b for b in (2, 5, 8))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def test_summarize_by_batch_hand_values():
    records = run_phase1(small_plan(PHASE_PRELIMINARY))
    rows = summarize_by_batch(records)
    assert [(r.function, r.batch_size) for r in rows] == [
        ("add_service", 2),
        ("select_service", 2),
    ]
    add_row = rows[0]
    group = [r for r in records if r.function == "add_service"]
    assert add_row.n == len(group) == 10
    assert add_row.latency_s_mean == pytest.approx(
        np.mean([r.latency_s for r in group])
    )
    assert add_row.latency_s_std == pytest.approx(
        np.std([r.latency_s for r in group], ddof=1)
    )


def test_summarize_sample_std_of_pair():
    class R:
        def __init__(self, latency):
            self.function = "add_service"
            self.batch_size = 2
            self.block_tx_count = 1
            self.block_size_kb = 1.0
            self.gas_price_gwei = 1.0
            self.latency_s = latency

    rows = summarize_by_batch([R(10.0), R(14.0)])
    assert rows[0].latency_s_mean == pytest.approx(12.0)
    assert rows[0].latency_s_std == pytest.approx(2.8284, abs=1e-4)


def test_summarize_single_record_std_zero_with_n_flag():
    class R:
        function = "calculate_penalty"
        batch_size = 2
        block_tx_count = 3
        block_size_kb = 2.0
        gas_price_gwei = 9.0
        latency_s = 11.0

    rows = summarize_by_batch([R()])
    assert rows[0].n == 1
    assert rows[0].latency_s_std == 0.0


def test_summarize_empty_is_error():
    with pytest.raises(WorkloadError):
        summarize_by_batch([])


def test_fee_policy_validation():
    with pytest.raises(ValueError):
        FeePolicy(mode="auction")
    with pytest.raises(ValueError):
        FeePolicy(suggested_tip_quantile=1.5)
    fixed = ExperimentPlan(
        phase=PHASE_PRELIMINARY, batch_sizes=(2,), rounds=1, chain=SMALL_CHAIN,
        fees=FeePolicy(mode="fixed", fixed_tip=3.0), seed=1,
    )
    records = run_phase1(fixed)
    assert len(records) == 12
