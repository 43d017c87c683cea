"""Contract state machines and gas metering."""

from __future__ import annotations

import pytest

from chainmarket.contracts import (
    ContractCall,
    ContractWorld,
    DuplicateServiceId,
    GasMismatch,
    GasSchedule,
    KpiReport,
    NoActiveAgreement,
    NotAConsumer,
    NotAProvider,
    ServiceCapExceeded,
    ThresholdNotReached,
    UnknownOpKind,
    UnknownService,
    ZeroBreaches,
    apply_call,
    audit_rows,
    price_receipt,
    published_total,
)

P, P2 = "0xprov1", "0xprov2"
C, C2 = "0xcons1", "0xcons2"


def make_world(**kwargs) -> ContractWorld:
    world = ContractWorld(**kwargs)
    for addr in (P, P2):
        world.register_actor(addr, "provider")
    for addr in (C, C2):
        world.register_actor(addr, "consumer")
    return world


def fill_services(world: ContractWorld, provider: str = P, count: int = 5) -> None:
    for sid in range(1, count + 1):
        world.add_service(provider, sid, "loc", 10)


# ---------------------------------------------------------------------------
# Published gas totals
# ---------------------------------------------------------------------------

def test_add_service_first_and_subsequent_totals():
    world = make_world()
    receipt, _ = world.add_service(P, 1, "loc", 10)
    assert receipt.total == 162_500
    assert receipt.cold_path
    for sid in (2, 3, 4, 5):
        receipt, _ = world.add_service(P, sid, "loc", 10)
        assert receipt.total == 147_500
        assert not receipt.cold_path


def test_select_service_warm_position_ladder():
    world = make_world()
    fill_services(world)
    # Burn the consumer's cold selection first.
    world.select_service(C, P, 1)
    totals = []
    for pos in range(1, 6):
        receipt, _ = world.select_service(C, P, pos)
        totals.append(receipt.total)
    assert totals == [138_752, 138_892, 139_032, 139_172, 139_312]
    # Adjacent warm totals differ by exactly the position step.
    assert all(b - a == 140 for a, b in zip(totals, totals[1:]))


def test_select_service_cold_position2_total():
    world = make_world()
    fill_services(world)
    receipt, _ = world.select_service(C, P, 2)
    assert receipt.cold_path
    assert receipt.total == 155_992


def test_register_breach_cold_then_warm():
    world = make_world()
    fill_services(world, count=1)
    world.select_service(C, P, 1)
    r1, _, _ = world.register_breach(P, 1)
    r2, _, _ = world.register_breach(P, 1)
    assert (r1.total, r2.total) == (44_058, 26_958)
    assert r1.cold_path and not r2.cold_path


def test_calculate_penalty_total():
    world = make_world()
    fill_services(world, count=1)
    world.select_service(C, P, 1)
    for _ in range(3):
        world.register_breach(P, 1)
    _, receipt, _ = world.calculate_penalty(P)
    assert receipt.total == 49_143


def test_audit_covers_all_eleven_published_cells():
    rows = audit_rows()
    assert len(rows) == 11
    assert all(r["match"] for r in rows)
    assert sorted(r["expected"] for r in rows) == sorted(
        [162_500, 147_500, 155_992, 138_752, 138_892, 139_032, 139_172, 139_312,
         44_058, 26_958, 49_143]
    )


# ---------------------------------------------------------------------------
# Structural deltas (receipt differencing, no table lookups)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("schedule", [GasSchedule(), GasSchedule(exec_step=2, memory_expansion_unit=5)])
def test_structural_deltas_by_differencing(schedule):
    # The cold/warm gap comes from op substitution, so it survives
    # perturbations of the ops shared by both paths.
    world = ContractWorld(schedule=schedule, strict_gas=False)
    world.register_actor(P, "provider")
    world.register_actor(C, "consumer")

    cold_add, _ = world.add_service(P, 1, "loc", 10)
    warm_add, _ = world.add_service(P, 2, "loc", 10)
    world.add_service(P, 3, "loc", 10)

    cold_sel, _ = world.select_service(C, P, 2)
    warm_sel, _ = world.select_service(C, P, 2)

    cold_breach, _, _ = world.register_breach(P, 1)
    warm_breach, _, _ = world.register_breach(P, 1)

    if schedule == GasSchedule():
        assert cold_add.total - warm_add.total == 15_000
        assert cold_sel.total - warm_sel.total == 17_100
        assert cold_breach.total - warm_breach.total == 17_100
    expected_select_gap = schedule.sstore_init - schedule.sstore_update
    assert cold_sel.total - warm_sel.total == expected_select_gap
    assert cold_breach.total - warm_breach.total == expected_select_gap
    assert cold_add.total - warm_add.total == (
        schedule.sstore_init - schedule.sstore_update - schedule.cold_sload
    )


def test_select_position_step_by_differencing():
    world = make_world()
    fill_services(world)
    world.select_service(C, P, 1)
    prev = None
    for pos in range(1, 6):
        receipt, _ = world.select_service(C, P, pos)
        if prev is not None:
            assert receipt.total - prev == 140
        prev = receipt.total


# ---------------------------------------------------------------------------
# price_receipt
# ---------------------------------------------------------------------------

def test_price_receipt_empty_trace_is_base_cost():
    assert price_receipt([], GasSchedule()) == 21_000


def test_price_receipt_illustrative_prices():
    schedule = GasSchedule(sstore_update=5_000, warm_sload=100)
    total = price_receipt([("sstore_update", 1), ("warm_sload", 1)], schedule)
    assert total == 26_100


def test_price_receipt_unknown_op():
    with pytest.raises(UnknownOpKind):
        price_receipt([("sstore_dance", 1)], GasSchedule())


def test_receipt_totals_equal_trace_price():
    world = make_world()
    receipt, _ = world.add_service(P, 1, "loc", 10)
    assert receipt.total == price_receipt(receipt.micro_ops, world.schedule)


def test_strict_mode_rejects_perturbed_schedule():
    bad = GasSchedule(sstore_update=2_901)
    world = ContractWorld(schedule=bad)  # strict by default
    world.register_actor(P, "provider")
    world.add_service(P, 1, "loc", 10)  # cold path avoids sstore_update
    with pytest.raises(GasMismatch):
        world.add_service(P, 2, "loc", 10)


# ---------------------------------------------------------------------------
# Preconditions and error paths
# ---------------------------------------------------------------------------

def test_add_service_requires_provider_role():
    world = make_world()
    with pytest.raises(NotAProvider):
        world.add_service(C, 1, "loc", 10)


def test_service_cap_at_five():
    world = make_world()
    fill_services(world)
    with pytest.raises(ServiceCapExceeded):
        world.add_service(P, 6, "loc", 10)


def test_duplicate_service_id_rejected():
    world = make_world()
    world.add_service(P, 1, "loc", 10)
    with pytest.raises(DuplicateServiceId):
        world.add_service(P, 1, "elsewhere", 20)


def test_get_service_read_after_write_and_unknown():
    world = make_world()
    world.add_service(P, 7, "loc", 10)
    service = world.get_service(7)
    assert (service.provider, service.location, service.cost) == (P, "loc", 10)
    with pytest.raises(UnknownService):
        world.get_service(99)


def test_get_service_is_pure():
    world = make_world()
    fill_services(world)
    before = world.state_hash()
    world.get_service(3)
    assert world.state_hash() == before


def test_select_requires_consumer_role_and_known_target():
    world = make_world()
    fill_services(world)
    with pytest.raises(NotAConsumer):
        world.select_service(P2, P, 1)
    with pytest.raises(UnknownService):
        world.select_service(C, P, 9)
    from chainmarket.contracts import UnknownProvider

    with pytest.raises(UnknownProvider):
        world.select_service(C, P2, 1)


def test_register_breach_preconditions():
    world = make_world()
    fill_services(world, count=1)
    with pytest.raises(NoActiveAgreement):
        world.register_breach(P, 1)
    world.select_service(C, P, 1)
    with pytest.raises(ZeroBreaches):
        world.register_breach(P, 0)


def test_failed_calls_leave_world_unchanged_and_emit_nothing():
    world = make_world()
    fill_services(world)
    world.add_service(P2, 1, "loc", 10)
    before_hash = world.state_hash()
    before_events = len(world.event_log)
    for exc, call in [
        (ServiceCapExceeded, lambda: world.add_service(P, 6, "loc", 10)),
        (DuplicateServiceId, lambda: world.add_service(P2, 1, "loc", 10)),
        (NotAConsumer, lambda: world.select_service(P2, P, 1)),
        (NoActiveAgreement, lambda: world.register_breach(P, 1)),
        (ThresholdNotReached, lambda: world.calculate_penalty(P)),
    ]:
        with pytest.raises(exc):
            call()
        assert world.state_hash() == before_hash
        assert len(world.event_log) == before_events


# ---------------------------------------------------------------------------
# Breach counting, triggers, penalty algebra
# ---------------------------------------------------------------------------

def agreement_world(**kwargs) -> ContractWorld:
    world = make_world(**kwargs)
    fill_services(world, count=1)
    world.select_service(C, P, 1)
    return world


def test_trigger_fires_exactly_at_cap():
    world = agreement_world()
    _, _, t1 = world.register_breach(P, 1)
    _, _, t2 = world.register_breach(P, 1)
    _, _, t3 = world.register_breach(P, 1)
    assert t1 is None and t2 is None
    assert t3 is not None and t3.provider == P
    # Saturated count does not re-trigger.
    _, _, t4 = world.register_breach(P, 1)
    assert t4 is None
    assert world.breaches[P] == 3


def test_breach_count_saturates_and_is_monotone():
    world = agreement_world()
    counts = []
    world.register_breach(P, 2)
    counts.append(world.breaches[P])
    world.register_breach(P, 5)
    counts.append(world.breaches[P])
    world.register_breach(P, 1)
    counts.append(world.breaches[P])
    assert counts == [2, 3, 3]
    assert counts == sorted(counts)


def test_bulk_breach_crossing_cap_triggers():
    world = agreement_world()
    _, _, trigger = world.register_breach(P, 5)
    assert trigger is not None
    assert world.breaches[P] == 3


def test_penalty_requires_threshold():
    world = agreement_world()
    world.register_breach(P, 2)
    with pytest.raises(ThresholdNotReached):
        world.calculate_penalty(P)


def test_penalty_linear_in_breaches_and_fee():
    world = agreement_world()
    for _ in range(3):
        world.register_breach(P, 1)
    penalty, _, _ = world.calculate_penalty(P)
    assert penalty == 3
    assert world.penalties[P] == 3

    world10 = agreement_world(fidelity_fee=10)
    for _ in range(3):
        world10.register_breach(P, 1)
    penalty, _, _ = world10.calculate_penalty(P)
    assert penalty == 30


def test_reset_on_penalty_flag():
    world = agreement_world(reset_on_penalty=True)
    for _ in range(3):
        world.register_breach(P, 1)
    world.calculate_penalty(P)
    assert world.breaches[P] == 0
    # Default world keeps the count.
    default = agreement_world()
    for _ in range(3):
        default.register_breach(P, 1)
    default.calculate_penalty(P)
    assert default.breaches[P] == 3


# ---------------------------------------------------------------------------
# Oracle feed
# ---------------------------------------------------------------------------

def test_oracle_no_breach_when_kpi_holds():
    world = make_world()
    report = KpiReport(P, "availability", observed=80.0, threshold=50.0, direction="must_exceed")
    assert world.fetch_oracle_report(report) is None


def test_oracle_breach_on_violation_both_directions():
    world = make_world()
    low = KpiReport(P, "availability", observed=40.0, threshold=50.0, direction="must_exceed")
    high = KpiReport(P, "jitter_ms", observed=80.0, threshold=50.0, direction="must_not_exceed")
    for report in (low, high):
        submission = world.fetch_oracle_report(report)
        assert submission is not None
        assert (submission.provider, submission.num_breaches) == (P, 1)


def test_three_violations_compose_to_penalty_trigger():
    world = agreement_world()
    trigger = None
    for _ in range(3):
        report = KpiReport(P, "availability", observed=40.0, threshold=50.0, direction="must_exceed")
        submission = world.fetch_oracle_report(report)
        _, _, trigger = world.register_breach(submission.provider, submission.num_breaches)
    assert world.breaches[P] == 3
    assert trigger is not None


# ---------------------------------------------------------------------------
# Events and replay
# ---------------------------------------------------------------------------

def test_each_successful_call_emits_exactly_one_event():
    world = agreement_world()
    start = len(world.event_log)
    world.add_service(P2, 1, "loc", 5)
    world.register_breach(P, 3)
    world.calculate_penalty(P)
    assert len(world.event_log) == start + 3
    kinds = [e.kind for e in world.event_log[start:]]
    assert kinds == ["ServiceAdded", "BreachRegistered", "PenaltyCalculated"]


def test_event_args_mirror_call_arguments():
    world = make_world()
    _, event = world.add_service(P, 4, "zone-a", 33)
    assert event.args == {"provider": P, "service_id": 4, "location": "zone-a", "cost": 33}
    world.select_service(C, P, 4)
    assert world.event_log[-1].args == {"consumer": C, "provider": P, "service_id": 4}


def test_replay_determinism_of_call_sequences():
    calls = [
        ContractCall("add_service", {"provider": P, "service_id": 1, "location": "l", "cost": 1}),
        ContractCall("add_service", {"provider": P, "service_id": 2, "location": "l", "cost": 2}),
        ContractCall("select_service", {"consumer": C, "provider": P, "service_id": 2}),
        ContractCall("register_breach", {"provider": P, "num_breaches": 3}),
        ContractCall("calculate_penalty", {"provider": P}),
    ]

    def replay():
        world = make_world()
        receipts = [apply_call(world, call)[0].total for call in calls]
        return receipts, world.state_hash()

    assert replay() == replay()


def test_published_total_rejects_unknown_function():
    with pytest.raises(ValueError):
        published_total("mint_token", True)
