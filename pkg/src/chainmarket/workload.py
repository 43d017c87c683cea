"""Two-phase batch experiments over the simulated chain.

Phase one (preliminary agreement): for each batch size b, b providers each
list five services, then b consumers each select one service, provider chosen
round-robin with the service position cycling 1..5. Phase two (enforcement):
each of b providers receives three violating KPI reports, producing three
breach registrations; the third triggers one penalty calculation, issued by
the harness on the paired consumer's behalf.

Every (phase, batch, round) cell runs on a fresh chain and contract world with
a seed derived from the plan seed, so cells replay independently and rounds
never contaminate each other. A batch's transactions arrive within one slot,
with a deterministic per-account jitter inside it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .chain import (
    Account,
    Chain,
    ChainConfig,
    SimulationFailure,
    Transaction,
)
from .contracts import ContractCall, ContractWorld, KpiReport, Selection, Service
from .rng import derive_seed, stream

PHASE_PRELIMINARY = "preliminary_agreement"
PHASE_ENFORCEMENT = "enforcement"
PHASES = (PHASE_PRELIMINARY, PHASE_ENFORCEMENT)

FUNCTION_ORDER = ("add_service", "select_service", "register_breach", "calculate_penalty")

# Per-function gas limits used when submitting (estimate with headroom).
_GAS_LIMITS = {
    "add_service": 180_000,
    "select_service": 170_000,
    "register_breach": 60_000,
    "calculate_penalty": 60_000,
}

_MAX_WAVE_SLOTS = 400
_VALIDATOR_COUNT = 16
_ACTOR_BALANCE = 1e15  # Gwei; never binds


class WorkloadError(Exception):
    pass


@dataclass(frozen=True, slots=True)
class FeePolicy:
    mode: str = "network_suggested"  # network_suggested | fixed
    suggested_tip_quantile: float = 0.5
    fixed_tip: float = 2.0

    def __post_init__(self):
        if self.mode not in ("network_suggested", "fixed"):
            raise ValueError(f"unknown fee mode {self.mode!r}")
        if not 0.0 <= self.suggested_tip_quantile <= 1.0:
            raise ValueError("suggested_tip_quantile must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentPlan:
    phase: str = PHASE_PRELIMINARY
    batch_sizes: tuple[int, ...] = (2, 10, 18, 26, 34, 42, 50)
    rounds: int = 10
    total_accounts: int = 100
    services_per_provider: int = 5
    chain: ChainConfig = field(default_factory=ChainConfig)
    fees: FeePolicy = field(default_factory=FeePolicy)
    max_breach: int = 3
    fidelity_fee: int = 1
    reset_on_penalty: bool = False
    seed: int = 0
    warmup_slots: int = 4

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if any(b > self.total_accounts for b in self.batch_sizes):
            raise ValueError("every batch size must be <= total_accounts")

    def expected_record_count(self) -> int:
        per_batch = 6 if self.phase == PHASE_PRELIMINARY else 4
        return self.rounds * sum(per_batch * b for b in self.batch_sizes)


@dataclass(frozen=True, slots=True)
class TxRecord:
    phase: str
    function: str
    batch_size: int
    round: int
    tx_id: int
    submit_time_s: float
    confirm_time_s: float
    latency_s: float
    gas_used: int
    gas_price_gwei: float
    block_number: int
    block_size_kb: float
    block_tx_count: int


@dataclass(frozen=True, slots=True)
class BlockRow:
    phase: str
    batch_size: int
    round: int
    number: int
    timestamp: float
    proposer: str
    gas_used: int
    byte_size: int
    base_fee: float
    tx_count: int


@dataclass(frozen=True, slots=True)
class RunManifest:
    seed: int
    config_digest: str
    code_version: str
    sim_time_start: float
    sim_time_end: float
    record_count: int
    block_count: int


# ---------------------------------------------------------------------------
# Account provisioning
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class ProvisionedAccounts:
    providers: list[Account]
    consumers: list[Account]
    validators: list[Account]

    def all(self) -> list[Account]:
        return self.providers + self.consumers + self.validators


def _address(seed: int, kind: str, index: int) -> str:
    digest = hashlib.sha256(f"{seed}/{kind}/{index}".encode()).hexdigest()
    return "0x" + digest[:40]


def provision_accounts(plan: ExperimentPlan) -> ProvisionedAccounts:
    """Split the EOAs evenly into providers and consumers (providers take the
    floor on odd counts) and add a staked validator set."""
    if plan.total_accounts < 2:
        raise WorkloadError("need at least two accounts")
    n_providers = plan.total_accounts // 2
    n_consumers = plan.total_accounts - n_providers

    providers = [
        Account(
            address=_address(plan.seed, "provider", i),
            balance=_ACTOR_BALANCE,
            role="provider",
        )
        for i in range(n_providers)
    ]
    consumers = [
        Account(
            address=_address(plan.seed, "consumer", i),
            balance=_ACTOR_BALANCE,
            role="consumer",
        )
        for i in range(n_consumers)
    ]
    stake_rng = stream(plan.seed, "stakes")
    stakes = stake_rng.integers(32, 129, _VALIDATOR_COUNT)
    validators = [
        Account(
            address=_address(plan.seed, "validator", i),
            balance=_ACTOR_BALANCE,
            stake=float(stakes[i]),
            role="validator",
        )
        for i in range(_VALIDATOR_COUNT)
    ]
    return ProvisionedAccounts(providers, consumers, validators)


# ---------------------------------------------------------------------------
# Cell execution
# ---------------------------------------------------------------------------

def _fresh_cell(plan: ExperimentPlan, phase: str, batch: int, rnd: int):
    cell_seed = derive_seed(plan.seed, "cell", phase, batch, rnd)
    accounts = provision_accounts(plan)
    if batch > len(accounts.providers) or batch > len(accounts.consumers):
        raise WorkloadError(
            f"batch {batch} exceeds the provisioned {len(accounts.providers)}"
            " providers/consumers"
        )
    world = ContractWorld(
        max_services_per_provider=plan.services_per_provider,
        max_breach=plan.max_breach,
        fidelity_fee=plan.fidelity_fee,
        reset_on_penalty=plan.reset_on_penalty,
    )
    for acct in accounts.providers:
        world.register_actor(acct.address, "provider")
    for acct in accounts.consumers:
        world.register_actor(acct.address, "consumer")
    config = replace(plan.chain, rng_seed=cell_seed)
    chain = Chain(config, accounts.all(), world)
    return chain, accounts, cell_seed


def _wave_tip(chain: Chain, fees: FeePolicy) -> float:
    if fees.mode == "fixed":
        return fees.fixed_tip
    return chain.suggest_tip(fees.suggested_tip_quantile, fees.fixed_tip)


def _submit_call(
    chain: Chain, sender: Account, call: ContractCall, submit_time: float, tip: float
) -> int:
    tx = Transaction(
        tx_id=chain.new_tx_id(),
        sender=sender.address,
        nonce=chain.next_nonce(sender.address),
        call=call,
        gas_limit=_GAS_LIMITS[call.function],
        max_fee=4.0 * chain.head.base_fee + tip,
        priority_fee=tip,
        submit_time=submit_time,
        payload_bytes=110 + 4 + 32 * call.arg_count(),
    )
    chain.submit_transaction(tx)
    return tx.tx_id


def _advance_until_included(
    chain: Chain, tx_ids: list[int], context: str
) -> list[dict]:
    """Advance slots until every tx in tx_ids is included; returns any
    penalty triggers observed along the way."""
    pending = set(tx_ids)
    triggers: list[dict] = []
    slots = 0
    while pending:
        events = chain.advance_slot()
        slots += 1
        for ev in events:
            if ev.kind == "tx_included":
                pending.discard(ev.data["tx_id"])
            elif ev.kind == "penalty_trigger":
                triggers.append(ev.data)
        if slots > _MAX_WAVE_SLOTS:
            raise SimulationFailure(
                f"{context}: {len(pending)} transactions still pending after"
                f" {_MAX_WAVE_SLOTS} slots"
            )
    return triggers


def _flush_finality(chain: Chain) -> None:
    for _ in range(chain.config.finality_depth):
        chain.advance_slot()


def _records_for(
    chain: Chain, tx_ids: list[int], phase: str, batch: int, rnd: int
) -> list[TxRecord]:
    records = []
    for tx_id in tx_ids:
        tx = chain.tx_index[tx_id]
        block = chain.blocks[tx.block_number]
        records.append(
            TxRecord(
                phase=phase,
                function=tx.call.function,
                batch_size=batch,
                round=rnd,
                tx_id=tx_id,
                submit_time_s=tx.submit_time,
                confirm_time_s=block.timestamp,
                latency_s=block.timestamp - tx.submit_time,
                gas_used=chain.receipts[tx_id].total,
                gas_price_gwei=chain.gas_price_of(tx_id),
                block_number=block.number,
                block_size_kb=block.byte_size / 1000.0,
                block_tx_count=len(block.transactions),
            )
        )
    return records


def _block_rows(chain: Chain, phase: str, batch: int, rnd: int) -> list[BlockRow]:
    return [
        BlockRow(
            phase=phase,
            batch_size=batch,
            round=rnd,
            number=b.number,
            timestamp=b.timestamp,
            proposer=b.proposer,
            gas_used=b.gas_used,
            byte_size=b.byte_size,
            base_fee=b.base_fee,
            tx_count=len(b.transactions),
        )
        for b in chain.blocks
    ]


def _run_phase1_cell(
    plan: ExperimentPlan, batch: int, rnd: int
) -> tuple[list[TxRecord], list[BlockRow]]:
    chain, accounts, cell_seed = _fresh_cell(plan, PHASE_PRELIMINARY, batch, rnd)
    for _ in range(plan.warmup_slots):
        chain.advance_slot()

    # Wave 1: each provider lists its services, all within one slot.
    tip = _wave_tip(chain, plan.fees)
    jitter = stream(cell_seed, "jitter", "adds").uniform(
        0.0, chain.config.slot_duration_s, batch
    )
    wave_start = chain.now
    add_ids: list[int] = []
    for i in range(batch):
        provider = accounts.providers[i]
        at = wave_start + float(jitter[i])
        for sid in range(1, plan.services_per_provider + 1):
            call = ContractCall(
                "add_service",
                {
                    "provider": provider.address,
                    "service_id": sid,
                    "location": f"region-{i % 8}",
                    "cost": 10 + sid,
                },
            )
            add_ids.append(_submit_call(chain, provider, call, at, tip))
    _advance_until_included(chain, add_ids, f"phase1 b={batch} r={rnd} adds")

    # Wave 2: consumers select, round-robin providers, positions cycling 1..5.
    tip = _wave_tip(chain, plan.fees)
    jitter = stream(cell_seed, "jitter", "selects").uniform(
        0.0, chain.config.slot_duration_s, batch
    )
    wave_start = chain.now
    select_ids: list[int] = []
    for i in range(batch):
        consumer = accounts.consumers[i]
        provider = accounts.providers[i % batch]
        position = (i % plan.services_per_provider) + 1
        call = ContractCall(
            "select_service",
            {
                "consumer": consumer.address,
                "provider": provider.address,
                "service_id": position,
            },
        )
        select_ids.append(
            _submit_call(chain, consumer, call, wave_start + float(jitter[i]), tip)
        )
    _advance_until_included(chain, select_ids, f"phase1 b={batch} r={rnd} selects")
    _flush_finality(chain)

    records = _records_for(chain, add_ids + select_ids, PHASE_PRELIMINARY, batch, rnd)
    return records, _block_rows(chain, PHASE_PRELIMINARY, batch, rnd)


def _seed_agreement(world: ContractWorld, consumer: str, provider: str) -> None:
    """Plant the phase-1 outcome a phase-2 cell builds on: one listed service
    and an active selection, without gas accounting."""
    world.services.setdefault(provider, []).append(
        Service(service_id=1, provider=provider, location="seeded", cost=10)
    )
    if provider not in world.provider_addresses:
        world.provider_addresses.append(provider)
    world.selections.append(
        Selection(consumer=consumer, provider=provider, service_id=1)
    )
    world.selection_count[consumer] = world.selection_count.get(consumer, 0) + 1


def _run_phase2_cell(
    plan: ExperimentPlan, batch: int, rnd: int
) -> tuple[list[TxRecord], list[BlockRow]]:
    chain, accounts, cell_seed = _fresh_cell(plan, PHASE_ENFORCEMENT, batch, rnd)
    consumer_of = {}
    for i in range(batch):
        provider = accounts.providers[i]
        consumer = accounts.consumers[i]
        consumer_of[provider.address] = consumer
        _seed_agreement(chain.contracts, consumer.address, provider.address)

    for _ in range(plan.warmup_slots):
        chain.advance_slot()

    # Breach wave: three violating KPI reports per provider, one breach each.
    tip = _wave_tip(chain, plan.fees)
    jitter = stream(cell_seed, "jitter", "breaches").uniform(
        0.0, chain.config.slot_duration_s, batch
    )
    wave_start = chain.now
    breach_ids: list[int] = []
    for i in range(batch):
        provider = accounts.providers[i]
        at = wave_start + float(jitter[i])
        for k in range(plan.max_breach):
            report = KpiReport(
                provider=provider.address,
                metric_name="availability",
                observed=90.0 - k,
                threshold=99.0,
                direction="must_exceed",
            )
            submission = chain.contracts.fetch_oracle_report(report)
            if submission is None:
                continue
            call = ContractCall(
                "register_breach",
                {
                    "provider": submission.provider,
                    "num_breaches": submission.num_breaches,
                },
            )
            breach_ids.append(_submit_call(chain, provider, call, at, tip))

    # Advance until all breaches land, issuing one penalty per trigger in the
    # slot window after its third breach confirms.
    pending = set(breach_ids)
    penalty_ids: list[int] = []
    awaiting: list[str] = []
    slots = 0
    penalty_jitter = stream(cell_seed, "jitter", "penalties")
    while pending or awaiting or (penalty_ids and any(
        chain.tx_index[t].status == "pending" for t in penalty_ids
    )):
        if awaiting:
            # Penalties are reactive: the harness submits within a couple of
            # seconds of observing the trigger, not on a batch clock.
            tip = _wave_tip(chain, plan.fees)
            wave_start = chain.now
            for provider_addr in awaiting:
                consumer = consumer_of[provider_addr]
                call = ContractCall("calculate_penalty", {"provider": provider_addr})
                at = wave_start + float(penalty_jitter.uniform(0.5, 2.0))
                penalty_ids.append(_submit_call(chain, consumer, call, at, tip))
            awaiting = []
        events = chain.advance_slot()
        slots += 1
        for ev in events:
            if ev.kind == "tx_included":
                pending.discard(ev.data["tx_id"])
            elif ev.kind == "penalty_trigger":
                awaiting.append(ev.data["provider"])
        if slots > _MAX_WAVE_SLOTS:
            raise SimulationFailure(
                f"phase2 b={batch} r={rnd}: enforcement wave stuck after"
                f" {_MAX_WAVE_SLOTS} slots"
            )
    _flush_finality(chain)

    records = _records_for(
        chain, breach_ids + penalty_ids, PHASE_ENFORCEMENT, batch, rnd
    )
    return records, _block_rows(chain, PHASE_ENFORCEMENT, batch, rnd)


# ---------------------------------------------------------------------------
# Phase drivers
# ---------------------------------------------------------------------------

def _run_phase(
    plan: ExperimentPlan, runner, phase: str, block_sink: list[BlockRow] | None
) -> list[TxRecord]:
    records: list[TxRecord] = []
    for batch in plan.batch_sizes:
        for rnd in range(1, plan.rounds + 1):
            try:
                cell_records, cell_blocks = runner(plan, batch, rnd)
            except SimulationFailure:
                raise
            except Exception as exc:
                raise SimulationFailure(
                    f"{phase} batch {batch} round {rnd} aborted: {exc}"
                ) from exc
            records.extend(cell_records)
            if block_sink is not None:
                block_sink.extend(cell_blocks)
    return records


def run_phase1(
    plan: ExperimentPlan, block_sink: list[BlockRow] | None = None
) -> list[TxRecord]:
    if plan.phase != PHASE_PRELIMINARY:
        plan = replace(plan, phase=PHASE_PRELIMINARY)
    return _run_phase(plan, _run_phase1_cell, PHASE_PRELIMINARY, block_sink)


def run_phase2(
    plan: ExperimentPlan, block_sink: list[BlockRow] | None = None
) -> list[TxRecord]:
    if plan.phase != PHASE_ENFORCEMENT:
        plan = replace(plan, phase=PHASE_ENFORCEMENT)
    return _run_phase(plan, _run_phase2_cell, PHASE_ENFORCEMENT, block_sink)


# ---------------------------------------------------------------------------
# Batch summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SummaryRow:
    function: str
    batch_size: int
    n: int
    tx_count_mean: float
    tx_count_std: float
    block_size_kb_mean: float
    block_size_kb_std: float
    gas_price_gwei_mean: float
    gas_price_gwei_std: float
    latency_s_mean: float
    latency_s_std: float


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def summarize_by_batch(records: list[TxRecord]) -> list[SummaryRow]:
    """Per (function, batch size) means and sample standard deviations."""
    if not records:
        raise WorkloadError("no records to summarise")
    groups: dict[tuple[str, int], list[TxRecord]] = {}
    for record in records:
        groups.setdefault((record.function, record.batch_size), []).append(record)

    def sort_key(key: tuple[str, int]):
        function, batch = key
        return (batch, FUNCTION_ORDER.index(function))

    rows = []
    for function, batch in sorted(groups, key=sort_key):
        group = groups[(function, batch)]
        tc = _mean_std([r.block_tx_count for r in group])
        bs = _mean_std([r.block_size_kb for r in group])
        gp = _mean_std([r.gas_price_gwei for r in group])
        lat = _mean_std([r.latency_s for r in group])
        rows.append(
            SummaryRow(
                function=function,
                batch_size=batch,
                n=len(group),
                tx_count_mean=tc[0],
                tx_count_std=tc[1],
                block_size_kb_mean=bs[0],
                block_size_kb_std=bs[1],
                gas_price_gwei_mean=gp[0],
                gas_price_gwei_std=gp[1],
                latency_s_mean=lat[0],
                latency_s_std=lat[1],
            )
        )
    return rows
